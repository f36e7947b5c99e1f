use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use super::{topo_order, GraphError, LayerKind, ModelGraph};
use crate::kernels::{conv_out_hw, pool_out_hw};
use crate::tensor::ShapeError;

/// Per-sample activation shape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Chw {
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Chw {
    pub const fn new(c: usize, h: usize, w: usize) -> Self {
        Chw { c, h, w }
    }

    pub fn numel(&self) -> usize {
        self.c * self.h * self.w
    }
}

impl fmt::Display for Chw {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}", self.c, self.h, self.w)
    }
}

pub type ShapeMap = BTreeMap<String, Chw>;

pub(crate) fn layer_shape(kind: &LayerKind, inputs: &[Chw]) -> Result<Chw, ShapeError> {
    let one = || inputs[0];
    let same_channels = |expected: usize| {
        let s = one();
        if s.c != expected {
            Err(ShapeError::ChannelMismatch { expected, got: s.c })
        } else {
            Ok(s)
        }
    };
    match kind {
        LayerKind::Input(s) => Ok(*s),
        LayerKind::Conv(p) => {
            p.validate()?;
            let s = same_channels(p.in_channels())?;
            let (h, w) = conv_out_hw(p, s.h, s.w)?;
            Ok(Chw::new(p.out_channels(), h, w))
        }
        LayerKind::Pool(p) => {
            p.validate()?;
            let s = one();
            let (h, w) = pool_out_hw(p, s.h, s.w)?;
            Ok(Chw::new(s.c, h, w))
        }
        LayerKind::Lrn(p) => {
            p.validate()?;
            Ok(one())
        }
        LayerKind::BatchNorm(p) => {
            p.validate()?;
            same_channels(p.channels())
        }
        LayerKind::Scale(p) => {
            p.validate()?;
            same_channels(p.channels())
        }
        LayerKind::Relu | LayerKind::Softmax | LayerKind::Dropout => Ok(one()),
        LayerKind::InnerProduct(p) => {
            p.validate()?;
            let s = one();
            if s.numel() != p.in_features {
                return Err(ShapeError::ChannelMismatch {
                    expected: p.in_features,
                    got: s.numel(),
                });
            }
            Ok(Chw::new(p.out_features, 1, 1))
        }
        LayerKind::Concat => {
            let first = one();
            if let Some(bad) = inputs.iter().find(|s| (s.h, s.w) != (first.h, first.w)) {
                return Err(ShapeError::Mismatch(format!(
                    "concat spatial extents differ: {}x{} vs {}x{}",
                    first.h, first.w, bad.h, bad.w
                )));
            }
            Ok(Chw::new(inputs.iter().map(|s| s.c).sum(), first.h, first.w))
        }
    }
}

/// Shapes of every node for a per-sample input of `input`.
pub fn infer_shapes(g: &ModelGraph, input: Chw) -> Result<ShapeMap, GraphError> {
    g.check()?;
    let mut shapes = ShapeMap::new();
    for id in topo_order(g)? {
        let node = g.node(&id)?;
        let s = if let LayerKind::Input(_) = node.kind {
            input
        } else {
            let ins: Vec<Chw> = node.inputs.iter().map(|i| shapes[i]).collect();
            layer_shape(&node.kind, &ins).map_err(|source| GraphError::Shape {
                node: id.clone(),
                source,
            })?
        };
        shapes.insert(id, s);
    }
    Ok(shapes)
}
