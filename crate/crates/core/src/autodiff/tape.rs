//! Append-only operation tape and reverse-mode backward pass.
//!
//! Every operation pushes one node holding its forward value and the ids of
//! its inputs. Inputs always refer to earlier nodes, so replaying the tape
//! back to front visits each node once in a valid topological order.

use std::cell::{Ref, RefCell};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

pub type NodeId = usize;

pub(crate) struct Node {
    pub(crate) value: Tensor,
    pub(crate) op: Op,
}

/// Recorded operation together with whatever the backward rule needs.
#[derive(Clone, Debug)]
pub(crate) enum Op {
    Leaf,
    MatMul {
        a: NodeId,
        b: NodeId,
        m: usize,
        k: usize,
        n: usize,
    },
    Transpose {
        a: NodeId,
        rows: usize,
        cols: usize,
    },
    Add {
        a: NodeId,
        b: NodeId,
    },
    Sub {
        a: NodeId,
        b: NodeId,
    },
    Mul {
        a: NodeId,
        b: NodeId,
    },
    Scale {
        a: NodeId,
        c: f64,
    },
    Offset {
        a: NodeId,
    },
    AddBias {
        x: NodeId,
        b: NodeId,
    },
    TileRows {
        a: NodeId,
    },
    Tanh {
        a: NodeId,
    },
    Sigmoid {
        a: NodeId,
    },
    Relu {
        a: NodeId,
    },
    Map {
        a: NodeId,
        df: fn(f64) -> f64,
    },
    ConcatLast {
        parts: Vec<(NodeId, usize)>,
    },
    ConcatRows {
        parts: Vec<NodeId>,
    },
    SliceLast {
        a: NodeId,
        start: usize,
    },
    SliceRows {
        a: NodeId,
        offset: usize,
    },
    Reshape {
        a: NodeId,
    },
    Sum {
        a: NodeId,
    },
    Mean {
        a: NodeId,
    },
    MeanRows {
        a: NodeId,
    },
    Mse {
        p: NodeId,
        t: NodeId,
    },
    Softmax {
        a: NodeId,
    },
    LayerNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Im2Col {
        a: NodeId,
        geom: ConvGeometry,
    },
}

/// Geometry of a square-kernel convolution over an `[h*w, c]` pixel-major image.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeometry {
    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn patch_len(&self) -> usize {
        self.kernel * self.kernel * self.channels
    }

    /// Calls `f(output_index, input_index)` for every non-padding tap.
    pub(crate) fn for_each_tap(&self, mut f: impl FnMut(usize, usize)) {
        let (oh, ow) = (self.out_height(), self.out_width());
        let k = self.kernel;
        let c = self.channels;
        let plen = self.patch_len();
        for oy in 0..oh {
            for ox in 0..ow {
                let row = (oy * ow + ox) * plen;
                for ky in 0..k {
                    let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                    if iy < 0 || iy >= self.height as isize {
                        continue;
                    }
                    for kx in 0..k {
                        let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                        if ix < 0 || ix >= self.width as isize {
                            continue;
                        }
                        let src = (iy as usize * self.width + ix as usize) * c;
                        let dst = row + (ky * k + kx) * c;
                        for ch in 0..c {
                            f(dst + ch, src + ch);
                        }
                    }
                }
            }
        }
    }
}

/// Recording context for one forward/backward pass.
///
/// A tape is confined to a single thread; independent tapes may run in
/// parallel.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    pub(crate) tape: &'t Tape,
    pub(crate) id: NodeId,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Records an input (parameter or constant).
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf)
    }

    pub fn scalar(&self, value: f64) -> Var<'_> {
        self.leaf(Tensor::scalar(value))
    }

    pub(crate) fn push(&self, value: Tensor, op: Op) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    pub(crate) fn nodes(&self) -> Ref<'_, Vec<Node>> {
        self.nodes.borrow()
    }

    /// Reverse sweep from a scalar loss.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        if !std::ptr::eq(loss.tape, self) {
            return Err(Error::Contract("loss belongs to a different tape".into()));
        }
        let nodes = self.nodes.borrow();
        if nodes[loss.id].value.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                nodes[loss.id].value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        grads[loss.id] = Some(vec![1.0]);
        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            crate::autodiff::ops::backprop(&nodes, id, &g, &mut grads);
            grads[id] = Some(g);
        }
        let shapes = nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }
}

/// Gradient of the loss with respect to every node on the tape.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient for `var`; nodes the loss never reached get zeros.
    pub fn get(&self, var: Var<'_>) -> Tensor {
        self.get_id(var.id)
    }

    pub fn get_id(&self, id: NodeId) -> Tensor {
        let shape = self.shapes[id].clone();
        match &self.grads[id] {
            Some(g) => Tensor::from_parts(shape, g.clone()),
            None => Tensor::zeros(&shape),
        }
    }

    pub fn reached(&self, var: Var<'_>) -> bool {
        self.grads[var.id].is_some()
    }
}

impl<'t> Var<'t> {
    pub fn id(&self) -> NodeId {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn numel(&self) -> usize {
        self.tape.nodes.borrow()[self.id].value.numel()
    }

    pub fn value(&self) -> Tensor {
        self.tape.nodes.borrow()[self.id].value.clone()
    }

    pub fn item(&self) -> f64 {
        self.tape.nodes.borrow()[self.id].value.item()
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.tape.nodes.borrow()[self.id].value.data().to_vec()
    }

    pub(crate) fn same_tape(&self, other: &Var<'_>) -> Result<()> {
        if std::ptr::eq(self.tape, other.tape) {
            Ok(())
        } else {
            Err(Error::Contract("operands live on different tapes".into()))
        }
    }
}
