//! Declarative branch architectures.
//!
//! A branch is an ordered layer list read from a small TOML document. Input
//! extents of every layer are inferred from the preceding shape, and a
//! flatten is implied where a linear layer follows a spatial one. The last
//! layer is always the embedding head `fc_r`, a linear layer with no
//! activation after it.

use std::fmt;
use std::str::FromStr;

use serde::Deserialize;

use super::{ModelError, Result};

pub const HEAD_NAME: &str = "fc_r";
pub const DEFAULT_EMBEDDING_DIM: usize = 128;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LayerKind {
    Conv {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    },
    MaxPool {
        kernel: usize,
        stride: usize,
    },
    Relu,
    Linear {
        in_features: usize,
        out_features: usize,
    },
    Dropout {
        p: f32,
    },
}

impl LayerKind {
    pub fn has_params(&self) -> bool {
        matches!(self, LayerKind::Conv { .. } | LayerKind::Linear { .. })
    }

    /// Shapes of weight and bias, if the layer has parameters.
    pub fn param_shapes(&self) -> Option<(Vec<usize>, Vec<usize>)> {
        match *self {
            LayerKind::Conv {
                in_channels,
                out_channels,
                kernel,
                ..
            } => Some((vec![out_channels, in_channels, kernel, kernel], vec![out_channels])),
            LayerKind::Linear {
                in_features,
                out_features,
            } => Some((vec![out_features, in_features], vec![out_features])),
            _ => None,
        }
    }

    pub fn fan_in(&self) -> usize {
        match *self {
            LayerKind::Conv {
                in_channels, kernel, ..
            } => in_channels * kernel * kernel,
            LayerKind::Linear { in_features, .. } => in_features,
            _ => 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerSpec {
    pub name: String,
    pub kind: LayerKind,
    /// Eligible for binding across branches under half-sharing.
    pub shareable: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BranchArch {
    pub name: String,
    /// `[channels, height, width]`
    pub input: [usize; 3],
    pub embedding_dim: usize,
    pub layers: Vec<LayerSpec>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ArchDoc {
    name: String,
    input: [usize; 3],
    #[serde(default)]
    embedding_dim: Option<usize>,
    layers: Vec<LayerDoc>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct LayerDoc {
    kind: String,
    name: Option<String>,
    out: Option<usize>,
    kernel: Option<usize>,
    stride: Option<usize>,
    pad: Option<usize>,
    p: Option<f32>,
    #[serde(default)]
    shareable: bool,
}

/// Activation shape after a layer, without the batch axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ActShape {
    Spatial { c: usize, h: usize, w: usize },
    Flat(usize),
}

impl ActShape {
    pub fn numel(&self) -> usize {
        match *self {
            ActShape::Spatial { c, h, w } => c * h * w,
            ActShape::Flat(n) => n,
        }
    }

    pub fn dims(&self) -> Vec<usize> {
        match *self {
            ActShape::Spatial { c, h, w } => vec![c, h, w],
            ActShape::Flat(n) => vec![n],
        }
    }
}

impl BranchArch {
    pub fn from_toml(text: &str) -> Result<Self> {
        let doc: ArchDoc = toml::from_str(text).map_err(|e| ModelError::Config(e.to_string()))?;
        let embedding_dim = doc.embedding_dim.unwrap_or(DEFAULT_EMBEDDING_DIM);
        let mut shape = ActShape::Spatial {
            c: doc.input[0],
            h: doc.input[1],
            w: doc.input[2],
        };
        if doc.input.contains(&0) {
            return Err(ModelError::Config(format!("input extents must be positive, got {:?}", doc.input)));
        }
        let mut layers = Vec::with_capacity(doc.layers.len());
        for (i, l) in doc.layers.iter().enumerate() {
            let at = |msg: String| ModelError::Config(format!("layer {i} ({}): {msg}", l.kind));
            let need = |v: Option<usize>, field: &str| v.ok_or_else(|| at(format!("missing `{field}`")));
            let (kind, next) = match l.kind.as_str() {
                "conv" => {
                    let ActShape::Spatial { c, h, w } = shape else {
                        return Err(at("convolution after a flat layer".into()));
                    };
                    let (out, k) = (need(l.out, "out")?, need(l.kernel, "kernel")?);
                    let (s, p) = (l.stride.unwrap_or(1), l.pad.unwrap_or(0));
                    if s == 0 || k == 0 || out == 0 {
                        return Err(at("out, kernel and stride must be positive".into()));
                    }
                    if k > h + 2 * p || k > w + 2 * p {
                        return Err(at(format!("kernel {k} exceeds padded input {h}x{w} (pad {p})")));
                    }
                    (
                        LayerKind::Conv {
                            in_channels: c,
                            out_channels: out,
                            kernel: k,
                            stride: s,
                            pad: p,
                        },
                        ActShape::Spatial {
                            c: out,
                            h: (h + 2 * p - k) / s + 1,
                            w: (w + 2 * p - k) / s + 1,
                        },
                    )
                }
                "max_pool" => {
                    let ActShape::Spatial { c, h, w } = shape else {
                        return Err(at("pooling after a flat layer".into()));
                    };
                    let k = need(l.kernel, "kernel")?;
                    let s = l.stride.unwrap_or(k);
                    if k == 0 || s == 0 || k > h || k > w {
                        return Err(at(format!("window {k} invalid for {h}x{w} input")));
                    }
                    (
                        LayerKind::MaxPool { kernel: k, stride: s },
                        ActShape::Spatial {
                            c,
                            h: (h - k) / s + 1,
                            w: (w - k) / s + 1,
                        },
                    )
                }
                "relu" => (LayerKind::Relu, shape),
                "dropout" => {
                    let p = l.p.ok_or_else(|| at("missing `p`".into()))?;
                    if !(0.0..1.0).contains(&p) {
                        return Err(at(format!("dropout probability {p} outside [0, 1)")));
                    }
                    (LayerKind::Dropout { p }, shape)
                }
                "linear" => {
                    let is_head = l.name.as_deref() == Some(HEAD_NAME);
                    let out = match (l.out, is_head) {
                        (Some(o), _) => o,
                        (None, true) => embedding_dim,
                        (None, false) => return Err(at("missing `out`".into())),
                    };
                    (
                        LayerKind::Linear {
                            in_features: shape.numel(),
                            out_features: out,
                        },
                        ActShape::Flat(out),
                    )
                }
                other => return Err(at(format!("unknown layer kind `{other}`"))),
            };
            let name = match (&l.name, kind.has_params()) {
                (Some(n), _) => n.clone(),
                (None, true) => return Err(at("parameterized layers need a `name`".into())),
                (None, false) => format!("{}{}", l.kind, i),
            };
            layers.push(LayerSpec {
                name,
                kind,
                shareable: l.shareable,
            });
            shape = next;
        }
        let arch = BranchArch {
            name: doc.name,
            input: doc.input,
            embedding_dim,
            layers,
        };
        arch.validate()?;
        Ok(arch)
    }

    fn validate(&self) -> Result<()> {
        let mut seen = std::collections::HashSet::new();
        for l in &self.layers {
            if !seen.insert(l.name.as_str()) {
                return Err(ModelError::Config(format!("duplicate layer name `{}`", l.name)));
            }
            if l.shareable && !l.kind.has_params() {
                return Err(ModelError::Config(format!("layer `{}` has no parameters to share", l.name)));
            }
        }
        match self.layers.last() {
            Some(LayerSpec {
                name,
                kind: LayerKind::Linear { out_features, .. },
                ..
            }) if name == HEAD_NAME && *out_features == self.embedding_dim => Ok(()),
            _ => Err(ModelError::Config(format!(
                "the last layer must be the linear embedding head `{HEAD_NAME}` with {} outputs",
                self.embedding_dim
            ))),
        }
    }

    pub fn head(&self) -> &LayerSpec {
        self.layers.last().expect("validated architecture has a head")
    }

    /// Parameterized layers below the embedding head, bottom to top.
    pub fn body_param_layers(&self) -> Vec<&LayerSpec> {
        let n = self.layers.len() - 1;
        self.layers[..n].iter().filter(|l| l.kind.has_params()).collect()
    }

    pub fn param_layers(&self) -> impl Iterator<Item = &LayerSpec> {
        self.layers.iter().filter(|l| l.kind.has_params())
    }

    pub fn layer(&self, name: &str) -> Option<&LayerSpec> {
        self.layers.iter().find(|l| l.name == name)
    }

    /// Width of the features entering the embedding head.
    pub fn feature_width(&self) -> usize {
        match self.head().kind {
            LayerKind::Linear { in_features, .. } => in_features,
            _ => unreachable!("validated head is linear"),
        }
    }

    /// Activation shape after every layer.
    pub fn shape_trace(&self) -> Vec<(String, ActShape)> {
        let mut shape = ActShape::Spatial {
            c: self.input[0],
            h: self.input[1],
            w: self.input[2],
        };
        self.layers
            .iter()
            .map(|l| {
                shape = match (l.kind, shape) {
                    (
                        LayerKind::Conv {
                            out_channels,
                            kernel,
                            stride,
                            pad,
                            ..
                        },
                        ActShape::Spatial { h, w, .. },
                    ) => ActShape::Spatial {
                        c: out_channels,
                        h: (h + 2 * pad - kernel) / stride + 1,
                        w: (w + 2 * pad - kernel) / stride + 1,
                    },
                    (LayerKind::MaxPool { kernel, stride }, ActShape::Spatial { c, h, w }) => ActShape::Spatial {
                        c,
                        h: (h - kernel) / stride + 1,
                        w: (w - kernel) / stride + 1,
                    },
                    (LayerKind::Linear { out_features, .. }, _) => ActShape::Flat(out_features),
                    (_, s) => s,
                };
                (l.name.clone(), shape)
            })
            .collect()
    }

    pub fn num_params(&self) -> usize {
        self.param_layers()
            .filter_map(|l| l.kind.param_shapes())
            .map(|(w, b)| w.iter().product::<usize>() + b[0])
            .sum()
    }
}

/// Size class of the built-in architectures.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    /// Full-size SketchANet/AlexNet-shaped stacks.
    Full,
    /// Five parameterized layers on 64x64 inputs.
    Mini,
}

impl FromStr for Preset {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Preset::Full),
            "mini" => Ok(Preset::Mini),
            other => Err(ModelError::UnknownPreset(other.to_string())),
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Preset::Full => "full",
            Preset::Mini => "mini",
        })
    }
}

/// Which built-in stack to use for a branch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BranchKind {
    /// SketchANet-shaped; used for sketches and edgemaps alike.
    Sketch,
    /// Sketch branch of the sketch-photo network.
    HybridSketch,
    /// AlexNet-shaped photo branch.
    Photo,
}

pub fn preset_arch(kind: BranchKind, preset: Preset) -> BranchArch {
    let text = match (kind, preset) {
        (BranchKind::Sketch, Preset::Mini) => include_str!("../../presets/sketch_mini.toml"),
        (BranchKind::HybridSketch, Preset::Mini) => include_str!("../../presets/hybrid_mini.toml"),
        (BranchKind::Photo, Preset::Mini) => include_str!("../../presets/photo_mini.toml"),
        (BranchKind::Sketch, Preset::Full) => include_str!("../../presets/sketch_full.toml"),
        (BranchKind::HybridSketch, Preset::Full) => include_str!("../../presets/hybrid_full.toml"),
        (BranchKind::Photo, Preset::Full) => include_str!("../../presets/photo_full.toml"),
    };
    BranchArch::from_toml(text).expect("built-in presets are valid")
}
