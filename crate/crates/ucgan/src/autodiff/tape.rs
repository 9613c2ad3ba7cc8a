use super::tensor::{numel, Tensor};
use super::{AutodiffError, Scalar};

/// Index of a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ValueId(pub(crate) usize);

impl ValueId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A recorded operation. Inputs are earlier tape positions, so the node list
/// is topologically ordered by construction.
#[derive(Debug, Clone)]
pub enum Op<T> {
    Leaf { trainable: bool },
    Add(ValueId, ValueId),
    Sub(ValueId, ValueId),
    Mul(ValueId, ValueId),
    Div(ValueId, ValueId),
    Scale(ValueId, T),
    AddScalar(ValueId, T),
    PowScalar(ValueId, T),
    Abs(ValueId),
    Exp(ValueId),
    Log(ValueId),
    Sqrt(ValueId),
    Square(ValueId),
    Elu(ValueId),
    Squash01(ValueId),
    Matmul(ValueId, ValueId),
    AddRowBias(ValueId, ValueId),
    AddChannelBias(ValueId, ValueId),
    Conv2d { x: ValueId, w: ValueId, pad: usize },
    AvgPool { x: ValueId, kernel: usize, stride: usize },
    UpsampleNearest2(ValueId),
    Softmax(ValueId),
    SumAll(ValueId),
    MeanAll(ValueId),
    MinAll(ValueId),
    MaxAll(ValueId),
    Concat { inputs: Vec<ValueId>, axis: usize },
    Reshape(ValueId),
    StopGradient(ValueId),
    NormalizePairs { x: ValueId, eps: T },
    PairAngles(ValueId),
    CyclicHistogram { x: ValueId, k: usize },
    TopKMean { x: ValueId, keep: usize },
    ReconImageMap { x: ValueId, y: ValueId },
    BatchNorm { x: ValueId, gamma: ValueId, beta: ValueId, eps: T },
    BatchNormAffine {
        x: ValueId,
        gamma: ValueId,
        beta: ValueId,
        mean: Vec<T>,
        var: Vec<T>,
        eps: T,
    },
    SelectColumns { x: ValueId, cols: Vec<usize> },
    BroadcastSpatial { x: ValueId, h: usize, w: usize },
}

#[derive(Debug)]
struct Node<T> {
    shape: Vec<usize>,
    data: Vec<T>,
    op: Op<T>,
}

/// Gradient buffers produced by one backward pass. Values that never received
/// a gradient (disconnected, or behind stop-gradient / frozen leaves) read as
/// `None`, which callers treat as exactly zero.
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, id: ValueId) -> Option<&[T]> {
        self.grads[id.0].as_deref()
    }

    /// Gradient as an owned dense buffer; zeros when disconnected.
    pub fn dense(&self, id: ValueId, len: usize) -> Vec<T> {
        match &self.grads[id.0] {
            Some(g) => g.clone(),
            None => vec![T::ZERO; len],
        }
    }
}

/// Wengert tape: eager forward evaluation plus reverse-order gradient
/// accumulation. One tape is built and differentiated by a single logical
/// thread; several backward passes over the same tape are independent.
#[derive(Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, id: ValueId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn value(&self, id: ValueId) -> &[T] {
        &self.nodes[id.0].data
    }

    /// Value of a one-element node.
    pub fn scalar_value(&self, id: ValueId) -> T {
        let n = &self.nodes[id.0];
        assert_eq!(n.data.len(), 1, "scalar_value on shape {:?}", n.shape);
        n.data[0]
    }

    // ---- leaves ------------------------------------------------------

    pub fn leaf(&mut self, tensor: &Tensor<T>) -> ValueId {
        self.leaf_data(
            tensor.shape().to_vec(),
            tensor.data().to_vec(),
            tensor.requires_grad(),
        )
    }

    /// Snapshots external data onto the tape. Frozen (`trainable = false`)
    /// leaves never accumulate gradient, which is how stop-gradient semantics
    /// for whole parameter sets are realized.
    pub fn leaf_data(&mut self, shape: Vec<usize>, data: Vec<T>, trainable: bool) -> ValueId {
        assert_eq!(
            numel(&shape),
            data.len(),
            "leaf shape {:?} vs data length {}",
            shape,
            data.len()
        );
        let id = ValueId(self.nodes.len());
        self.nodes.push(Node {
            shape,
            data,
            op: Op::Leaf { trainable },
        });
        id
    }

    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<T>) -> ValueId {
        self.leaf_data(shape, data, false)
    }

    pub fn constant_scalar(&mut self, v: T) -> ValueId {
        self.leaf_data(vec![], vec![v], false)
    }

    /// Overwrites a leaf's value in place (used by tape replay tests and by
    /// finite-difference probes). Panics on non-leaf nodes.
    pub fn set_leaf_value(&mut self, id: ValueId, data: Vec<T>) {
        let node = &mut self.nodes[id.0];
        assert!(matches!(node.op, Op::Leaf { .. }), "set_leaf_value on non-leaf");
        assert_eq!(node.data.len(), data.len());
        node.data = data;
    }

    fn push(&mut self, op: Op<T>, shape: Vec<usize>) -> ValueId {
        let data = eval_op(&self.nodes, &op, &shape);
        debug_assert_eq!(data.len(), numel(&shape));
        let id = ValueId(self.nodes.len());
        self.nodes.push(Node { shape, data, op });
        id
    }

    fn assert_same_shape(&self, a: ValueId, b: ValueId, what: &str) {
        assert_eq!(
            self.shape(a),
            self.shape(b),
            "{what}: shapes {:?} and {:?} differ",
            self.shape(a),
            self.shape(b)
        );
    }

    // ---- elementwise -------------------------------------------------

    pub fn add(&mut self, a: ValueId, b: ValueId) -> ValueId {
        self.assert_same_shape(a, b, "add");
        self.push(Op::Add(a, b), self.shape(a).to_vec())
    }

    pub fn sub(&mut self, a: ValueId, b: ValueId) -> ValueId {
        self.assert_same_shape(a, b, "sub");
        self.push(Op::Sub(a, b), self.shape(a).to_vec())
    }

    pub fn mul(&mut self, a: ValueId, b: ValueId) -> ValueId {
        self.assert_same_shape(a, b, "mul");
        self.push(Op::Mul(a, b), self.shape(a).to_vec())
    }

    pub fn div(&mut self, a: ValueId, b: ValueId) -> ValueId {
        self.assert_same_shape(a, b, "div");
        self.push(Op::Div(a, b), self.shape(a).to_vec())
    }

    pub fn scale(&mut self, x: ValueId, c: T) -> ValueId {
        self.push(Op::Scale(x, c), self.shape(x).to_vec())
    }

    pub fn add_scalar(&mut self, x: ValueId, c: T) -> ValueId {
        self.push(Op::AddScalar(x, c), self.shape(x).to_vec())
    }

    pub fn pow_scalar(&mut self, x: ValueId, c: T) -> ValueId {
        self.push(Op::PowScalar(x, c), self.shape(x).to_vec())
    }

    pub fn abs(&mut self, x: ValueId) -> ValueId {
        self.push(Op::Abs(x), self.shape(x).to_vec())
    }

    pub fn exp(&mut self, x: ValueId) -> ValueId {
        self.push(Op::Exp(x), self.shape(x).to_vec())
    }

    pub fn log(&mut self, x: ValueId) -> ValueId {
        self.push(Op::Log(x), self.shape(x).to_vec())
    }

    pub fn sqrt(&mut self, x: ValueId) -> ValueId {
        self.push(Op::Sqrt(x), self.shape(x).to_vec())
    }

    pub fn square(&mut self, x: ValueId) -> ValueId {
        self.push(Op::Square(x), self.shape(x).to_vec())
    }

    pub fn elu(&mut self, x: ValueId) -> ValueId {
        self.push(Op::Elu(x), self.shape(x).to_vec())
    }

    /// Smooth squashing of the real line onto (0, 1): `(tanh(x) + 1) / 2`.
    pub fn squash01(&mut self, x: ValueId) -> ValueId {
        self.push(Op::Squash01(x), self.shape(x).to_vec())
    }

    // ---- linear algebra ---------------------------------------------

    pub fn matmul(&mut self, a: ValueId, b: ValueId) -> ValueId {
        let (sa, sb) = (self.shape(a), self.shape(b));
        assert!(
            sa.len() == 2 && sb.len() == 2 && sa[1] == sb[0],
            "matmul: incompatible shapes {sa:?} x {sb:?}"
        );
        let shape = vec![sa[0], sb[1]];
        self.push(Op::Matmul(a, b), shape)
    }

    /// `[n, f] + [f]` row-broadcast bias.
    pub fn add_row_bias(&mut self, x: ValueId, bias: ValueId) -> ValueId {
        let (sx, sb) = (self.shape(x), self.shape(bias));
        assert!(
            sx.len() == 2 && sb.len() == 1 && sx[1] == sb[0],
            "add_row_bias: {sx:?} + {sb:?}"
        );
        self.push(Op::AddRowBias(x, bias), sx.to_vec())
    }

    /// `[n, c, h, w] + [c]` channel-broadcast bias.
    pub fn add_channel_bias(&mut self, x: ValueId, bias: ValueId) -> ValueId {
        let (sx, sb) = (self.shape(x), self.shape(bias));
        assert!(
            sx.len() == 4 && sb.len() == 1 && sx[1] == sb[0],
            "add_channel_bias: {sx:?} + {sb:?}"
        );
        self.push(Op::AddChannelBias(x, bias), sx.to_vec())
    }

    /// 2-D convolution, stride fixed to one. `x: [n, c_in, h, w]`,
    /// `w: [c_out, c_in, kh, kw]`, zero padding `pad` on each side.
    pub fn conv2d(&mut self, x: ValueId, w: ValueId, pad: usize) -> ValueId {
        let (sx, sw) = (self.shape(x), self.shape(w));
        assert!(sx.len() == 4 && sw.len() == 4, "conv2d ranks: {sx:?}, {sw:?}");
        assert_eq!(sx[1], sw[1], "conv2d channel mismatch: {sx:?} vs {sw:?}");
        let oh = sx[2] + 2 * pad + 1 - sw[2];
        let ow = sx[3] + 2 * pad + 1 - sw[3];
        let shape = vec![sx[0], sw[0], oh, ow];
        self.push(Op::Conv2d { x, w, pad }, shape)
    }

    /// Average pooling with square kernel, no padding.
    pub fn avg_pool(&mut self, x: ValueId, kernel: usize, stride: usize) -> ValueId {
        let sx = self.shape(x);
        assert!(sx.len() == 4, "avg_pool rank: {sx:?}");
        assert!(kernel >= 1 && stride >= 1 && sx[2] >= kernel && sx[3] >= kernel);
        let oh = (sx[2] - kernel) / stride + 1;
        let ow = (sx[3] - kernel) / stride + 1;
        let shape = vec![sx[0], sx[1], oh, ow];
        self.push(Op::AvgPool { x, kernel, stride }, shape)
    }

    /// Nearest-neighbor 2x upsample of `[n, c, h, w]`.
    pub fn upsample_nearest2(&mut self, x: ValueId) -> ValueId {
        let sx = self.shape(x);
        assert!(sx.len() == 4, "upsample rank: {sx:?}");
        let shape = vec![sx[0], sx[1], sx[2] * 2, sx[3] * 2];
        self.push(Op::UpsampleNearest2(x), shape)
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: ValueId) -> ValueId {
        let sx = self.shape(x);
        assert!(!sx.is_empty(), "softmax needs rank >= 1");
        self.push(Op::Softmax(x), sx.to_vec())
    }

    // ---- reductions --------------------------------------------------

    pub fn sum_all(&mut self, x: ValueId) -> ValueId {
        self.push(Op::SumAll(x), vec![])
    }

    pub fn mean_all(&mut self, x: ValueId) -> ValueId {
        assert!(numel(self.shape(x)) > 0);
        self.push(Op::MeanAll(x), vec![])
    }

    pub fn min_all(&mut self, x: ValueId) -> ValueId {
        assert!(numel(self.shape(x)) > 0);
        self.push(Op::MinAll(x), vec![])
    }

    pub fn max_all(&mut self, x: ValueId) -> ValueId {
        assert!(numel(self.shape(x)) > 0);
        self.push(Op::MaxAll(x), vec![])
    }

    // ---- structure ---------------------------------------------------

    pub fn concat(&mut self, inputs: &[ValueId], axis: usize) -> ValueId {
        assert!(!inputs.is_empty(), "concat of nothing");
        let first = self.shape(inputs[0]).to_vec();
        assert!(axis < first.len(), "concat axis {axis} out of rank {}", first.len());
        let mut axis_total = 0;
        for &id in inputs {
            let s = self.shape(id);
            assert_eq!(s.len(), first.len(), "concat rank mismatch");
            for (d, (&a, &b)) in s.iter().zip(first.iter()).enumerate() {
                if d != axis {
                    assert_eq!(a, b, "concat non-axis extent mismatch at dim {d}");
                }
            }
            axis_total += s[axis];
        }
        let mut shape = first;
        shape[axis] = axis_total;
        self.push(
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            shape,
        )
    }

    /// Stacks one-element values into a rank-1 vector.
    pub fn stack_scalars(&mut self, inputs: &[ValueId]) -> ValueId {
        let reshaped: Vec<ValueId> = inputs.iter().map(|&id| self.reshape(id, vec![1])).collect();
        self.concat(&reshaped, 0)
    }

    pub fn reshape(&mut self, x: ValueId, shape: Vec<usize>) -> ValueId {
        assert_eq!(
            numel(self.shape(x)),
            numel(&shape),
            "reshape {:?} -> {:?}",
            self.shape(x),
            shape
        );
        self.push(Op::Reshape(x), shape)
    }

    /// Passes values through and blocks all gradient flow.
    pub fn stop_gradient(&mut self, x: ValueId) -> ValueId {
        self.push(Op::StopGradient(x), self.shape(x).to_vec())
    }

    // ---- structured kernels -----------------------------------------

    /// Projects each consecutive `(x, y)` pair of the last axis onto the unit
    /// circle: `v / sqrt(x^2 + y^2 + eps)`.
    pub fn normalize_pairs(&mut self, x: ValueId, eps: T) -> ValueId {
        let sx = self.shape(x);
        assert!(
            sx.last().is_some_and(|d| d % 2 == 0),
            "normalize_pairs needs an even last axis, got {sx:?}"
        );
        self.push(Op::NormalizePairs { x, eps }, sx.to_vec())
    }

    /// `atan2(y, x)` per consecutive pair; output halves the last axis.
    pub fn pair_angles(&mut self, x: ValueId) -> ValueId {
        let sx = self.shape(x);
        assert!(
            sx.last().is_some_and(|d| d % 2 == 0),
            "pair_angles needs an even last axis, got {sx:?}"
        );
        let mut shape = sx.to_vec();
        *shape.last_mut().unwrap() /= 2;
        self.push(Op::PairAngles(x), shape)
    }

    /// Soft histogram over the angle circle. A rank-1 input of N angles gives
    /// `[k]` masses; a rank-2 `[n, d]` input gives `[d, k]` per-dimension
    /// histograms taken over the batch axis. Masses sum to one per histogram
    /// and each angle splits its 1/N linearly between its two adjacent nodes,
    /// wrapping between the last node and the first.
    pub fn cyclic_histogram(&mut self, x: ValueId, k: usize) -> ValueId {
        let sx = self.shape(x);
        assert!(k >= 2, "cyclic_histogram needs k >= 2");
        assert!(numel(sx) >= 1, "cyclic_histogram of empty input");
        let shape = match sx.len() {
            1 => vec![k],
            2 => vec![sx[1], k],
            r => panic!("cyclic_histogram supports ranks 1 and 2, got {r}"),
        };
        self.push(Op::CyclicHistogram { x, k }, shape)
    }

    /// Mean of the `keep` largest entries; gradient flows only to those.
    /// Ties break on the lower flat index.
    pub fn top_k_mean(&mut self, x: ValueId, keep: usize) -> ValueId {
        let n = numel(self.shape(x));
        assert!(keep >= 1 && keep <= n, "top_k_mean keep {keep} of {n}");
        self.push(Op::TopKMean { x, keep }, vec![])
    }

    /// Per-pixel reconstruction distance between two `[n, 3, h, w]` images:
    /// `sum_c 2|x_c - y_c| + | |dY/du|+|dY/dv| (x)  -  same(y) |` with Y the
    /// YIQ luma and central differences over a replicated border.
    pub fn recon_image_map(&mut self, x: ValueId, y: ValueId) -> ValueId {
        self.assert_same_shape(x, y, "recon_image_map");
        let sx = self.shape(x);
        assert!(
            sx.len() == 4 && sx[1] == 3,
            "recon_image_map expects [n, 3, h, w], got {sx:?}"
        );
        let shape = vec![sx[0], sx[2], sx[3]];
        self.push(Op::ReconImageMap { x, y }, shape)
    }

    /// Per-channel normalization with batch statistics (training mode).
    /// Returns the output id plus the batch mean and biased variance so the
    /// caller can maintain running statistics.
    pub fn batch_norm(
        &mut self,
        x: ValueId,
        gamma: ValueId,
        beta: ValueId,
        eps: T,
    ) -> (ValueId, Vec<T>, Vec<T>) {
        let sx = self.shape(x).to_vec();
        let c = bn_channels(&sx);
        assert_eq!(self.shape(gamma), &[c], "batch_norm gamma shape");
        assert_eq!(self.shape(beta), &[c], "batch_norm beta shape");
        let (mean, var) = bn_stats(&sx, self.value(x));
        let id = self.push(Op::BatchNorm { x, gamma, beta, eps }, sx);
        (id, mean, var)
    }

    /// Per-channel affine normalization with fixed (running) statistics.
    pub fn batch_norm_affine(
        &mut self,
        x: ValueId,
        gamma: ValueId,
        beta: ValueId,
        mean: Vec<T>,
        var: Vec<T>,
        eps: T,
    ) -> ValueId {
        let sx = self.shape(x).to_vec();
        let c = bn_channels(&sx);
        assert_eq!(mean.len(), c);
        assert_eq!(var.len(), c);
        assert_eq!(self.shape(gamma), &[c]);
        assert_eq!(self.shape(beta), &[c]);
        self.push(
            Op::BatchNormAffine {
                x,
                gamma,
                beta,
                mean,
                var,
                eps,
            },
            sx,
        )
    }

    /// Picks one column per row of a `[n, c]` matrix.
    pub fn select_columns(&mut self, x: ValueId, cols: Vec<usize>) -> ValueId {
        let sx = self.shape(x);
        assert!(sx.len() == 2, "select_columns rank: {sx:?}");
        assert_eq!(cols.len(), sx[0], "one column index per row");
        assert!(cols.iter().all(|&c| c < sx[1]), "column index out of range");
        let shape = vec![sx[0]];
        self.push(Op::SelectColumns { x, cols }, shape)
    }

    /// Replicates a `[n, c]` matrix over an `h x w` spatial grid.
    pub fn broadcast_spatial(&mut self, x: ValueId, h: usize, w: usize) -> ValueId {
        let sx = self.shape(x);
        assert!(sx.len() == 2, "broadcast_spatial rank: {sx:?}");
        let shape = vec![sx[0], sx[1], h, w];
        self.push(Op::BroadcastSpatial { x, h, w }, shape)
    }

    // ---- verification ------------------------------------------------

    /// Every value on the tape must be finite after a forward pass.
    pub fn check_finite_all(&self) -> Result<(), AutodiffError> {
        for (i, node) in self.nodes.iter().enumerate() {
            if !node.data.iter().all(|v| v.is_finite()) {
                return Err(AutodiffError::NonFinite(format!(
                    "tape value {} ({})",
                    i,
                    op_name(&node.op)
                )));
            }
        }
        Ok(())
    }

    /// Re-evaluates every non-leaf node in order from current leaf values.
    /// With unchanged leaves the result is bit-identical to the original
    /// forward pass.
    pub fn replay(&mut self) {
        for i in 0..self.nodes.len() {
            let (done, rest) = self.nodes.split_at_mut(i);
            let node = &mut rest[0];
            if matches!(node.op, Op::Leaf { .. }) {
                continue;
            }
            node.data = eval_op(done, &node.op, &node.shape);
        }
    }

    // ---- backward ----------------------------------------------------

    /// Reverse pass seeding `d loss / d loss = 1`. The loss must be a single
    /// element. Returns per-node gradient buffers; frozen leaves and values
    /// behind stop-gradient stay `None`.
    pub fn backward(&self, loss: ValueId) -> Result<Gradients<T>, AutodiffError> {
        let loss_node = &self.nodes[loss.0];
        if loss_node.data.len() != 1 {
            return Err(AutodiffError::LossNotScalar(loss_node.shape.clone()));
        }
        if !loss_node.data[0].is_finite() {
            return Err(AutodiffError::NonFinite("loss".to_string()));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![T::ONE]);

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }

        for (i, g) in grads.iter().enumerate() {
            if let Some(g) = g {
                if !g.iter().all(|v| v.is_finite()) {
                    return Err(AutodiffError::NonFinite(format!(
                        "gradient of tape value {} ({})",
                        i,
                        op_name(&self.nodes[i].op)
                    )));
                }
            }
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        let val = |id: ValueId| -> &[T] { &self.nodes[id.0].data };
        let shp = |id: ValueId| -> &[usize] { &self.nodes[id.0].shape };
        let mut acc = |id: ValueId, f: &mut dyn FnMut(&mut [T])| {
            // frozen leaves never receive gradient
            if let Op::Leaf { trainable: false } = self.nodes[id.0].op {
                return;
            }
            let buf = grads[id.0].get_or_insert_with(|| vec![T::ZERO; self.nodes[id.0].data.len()]);
            f(buf);
        };

        match &node.op {
            Op::Leaf { .. } => {}
            Op::StopGradient(_) => {}
            Op::Add(a, b) => {
                acc(*a, &mut |ga| add_assign(ga, g));
                acc(*b, &mut |gb| add_assign(gb, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |ga| add_assign(ga, g));
                acc(*b, &mut |gb| sub_assign(gb, g));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                acc(*a, &mut |ga| {
                    for ((ga, &g), &b) in ga.iter_mut().zip(g).zip(bv) {
                        *ga += g * b;
                    }
                });
                acc(*b, &mut |gb| {
                    for ((gb, &g), &a) in gb.iter_mut().zip(g).zip(av) {
                        *gb += g * a;
                    }
                });
            }
            Op::Div(a, b) => {
                let bv = val(*b);
                let yv = &node.data;
                acc(*a, &mut |ga| {
                    for ((ga, &g), &b) in ga.iter_mut().zip(g).zip(bv) {
                        *ga += g / b;
                    }
                });
                acc(*b, &mut |gb| {
                    for (((gb, &g), &b), &y) in gb.iter_mut().zip(g).zip(bv).zip(yv) {
                        *gb -= g * y / b;
                    }
                });
            }
            Op::Scale(x, c) => {
                let c = *c;
                acc(*x, &mut |gx| {
                    for (gx, &g) in gx.iter_mut().zip(g) {
                        *gx += g * c;
                    }
                });
            }
            Op::AddScalar(x, _) => acc(*x, &mut |gx| add_assign(gx, g)),
            Op::PowScalar(x, c) => {
                let c = *c;
                let xv = val(*x);
                acc(*x, &mut |gx| {
                    for ((gx, &g), &x) in gx.iter_mut().zip(g).zip(xv) {
                        *gx += g * c * x.powf(c - T::ONE);
                    }
                });
            }
            Op::Abs(x) => {
                let xv = val(*x);
                acc(*x, &mut |gx| {
                    for ((gx, &g), &x) in gx.iter_mut().zip(g).zip(xv) {
                        *gx += g * sign(x);
                    }
                });
            }
            Op::Exp(x) => {
                let yv = &node.data;
                acc(*x, &mut |gx| {
                    for ((gx, &g), &y) in gx.iter_mut().zip(g).zip(yv) {
                        *gx += g * y;
                    }
                });
            }
            Op::Log(x) => {
                let xv = val(*x);
                acc(*x, &mut |gx| {
                    for ((gx, &g), &x) in gx.iter_mut().zip(g).zip(xv) {
                        *gx += g / x;
                    }
                });
            }
            Op::Sqrt(x) => {
                let yv = &node.data;
                acc(*x, &mut |gx| {
                    let two = T::from_f64(2.0);
                    for ((gx, &g), &y) in gx.iter_mut().zip(g).zip(yv) {
                        *gx += g / (two * y);
                    }
                });
            }
            Op::Square(x) => {
                let xv = val(*x);
                acc(*x, &mut |gx| {
                    let two = T::from_f64(2.0);
                    for ((gx, &g), &x) in gx.iter_mut().zip(g).zip(xv) {
                        *gx += g * two * x;
                    }
                });
            }
            Op::Elu(x) => {
                let xv = val(*x);
                acc(*x, &mut |gx| {
                    for ((gx, &g), &x) in gx.iter_mut().zip(g).zip(xv) {
                        *gx += if x > T::ZERO { g } else { g * x.exp() };
                    }
                });
            }
            Op::Squash01(x) => {
                let yv = &node.data;
                acc(*x, &mut |gx| {
                    let two = T::from_f64(2.0);
                    for ((gx, &g), &y) in gx.iter_mut().zip(g).zip(yv) {
                        *gx += g * two * y * (T::ONE - y);
                    }
                });
            }
            Op::Matmul(a, b) => {
                let (m, k) = (shp(*a)[0], shp(*a)[1]);
                let n = shp(*b)[1];
                let (av, bv) = (val(*a), val(*b));
                acc(*a, &mut |ga| {
                    // ga[i, l] += sum_j g[i, j] * b[l, j]
                    for i in 0..m {
                        for l in 0..k {
                            let mut s = T::ZERO;
                            let grow = &g[i * n..(i + 1) * n];
                            let brow = &bv[l * n..(l + 1) * n];
                            for (&gv, &bvv) in grow.iter().zip(brow) {
                                s += gv * bvv;
                            }
                            ga[i * k + l] += s;
                        }
                    }
                });
                acc(*b, &mut |gb| {
                    // gb[l, j] += sum_i a[i, l] * g[i, j]
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for l in 0..k {
                            let a_il = av[i * k + l];
                            let gbrow = &mut gb[l * n..(l + 1) * n];
                            for (gbv, &gv) in gbrow.iter_mut().zip(grow) {
                                *gbv += a_il * gv;
                            }
                        }
                    }
                });
            }
            Op::AddRowBias(x, bias) => {
                let f = shp(*x)[1];
                acc(*x, &mut |gx| add_assign(gx, g));
                acc(*bias, &mut |gb| {
                    for row in g.chunks_exact(f) {
                        for (gb, &gv) in gb.iter_mut().zip(row) {
                            *gb += gv;
                        }
                    }
                });
            }
            Op::AddChannelBias(x, bias) => {
                let sx = shp(*x);
                let (c, plane) = (sx[1], sx[2] * sx[3]);
                acc(*x, &mut |gx| add_assign(gx, g));
                acc(*bias, &mut |gb| {
                    for img in g.chunks_exact(c * plane) {
                        for (ch, gb) in gb.iter_mut().enumerate().map(|(i, v)| (i, v)) {
                            let s: T = img[ch * plane..(ch + 1) * plane].iter().copied().sum();
                            *gb += s;
                        }
                    }
                });
            }
            Op::Conv2d { x, w, pad } => {
                let (sx, sw) = (shp(*x).to_vec(), shp(*w).to_vec());
                let so = &node.shape;
                let xv = val(*x);
                let wv = val(*w);
                acc(*x, &mut |gx| {
                    conv2d_backward_input(gx, g, wv, &sx, &sw, so, *pad);
                });
                acc(*w, &mut |gw| {
                    conv2d_backward_weight(gw, g, xv, &sx, &sw, so, *pad);
                });
            }
            Op::AvgPool { x, kernel, stride } => {
                let sx = shp(*x).to_vec();
                let so = node.shape.clone();
                let (kernel, stride) = (*kernel, *stride);
                acc(*x, &mut |gx| {
                    let inv = T::ONE / T::from_f64((kernel * kernel) as f64);
                    let (n, c, ih, iw) = (sx[0], sx[1], sx[2], sx[3]);
                    let (oh, ow) = (so[2], so[3]);
                    for ni in 0..n {
                        for ci in 0..c {
                            let gbase = (ni * c + ci) * oh * ow;
                            let xbase = (ni * c + ci) * ih * iw;
                            for oy in 0..oh {
                                for ox in 0..ow {
                                    let gv = g[gbase + oy * ow + ox] * inv;
                                    for ky in 0..kernel {
                                        let row = xbase + (oy * stride + ky) * iw + ox * stride;
                                        for kx in 0..kernel {
                                            gx[row + kx] += gv;
                                        }
                                    }
                                }
                            }
                        }
                    }
                });
            }
            Op::UpsampleNearest2(x) => {
                let sx = shp(*x).to_vec();
                acc(*x, &mut |gx| {
                    let (n, c, h, w) = (sx[0], sx[1], sx[2], sx[3]);
                    let (oh, ow) = (h * 2, w * 2);
                    for ni in 0..n {
                        for ci in 0..c {
                            let obase = (ni * c + ci) * oh * ow;
                            let ibase = (ni * c + ci) * h * w;
                            for oy in 0..oh {
                                for ox in 0..ow {
                                    gx[ibase + (oy / 2) * w + ox / 2] += g[obase + oy * ow + ox];
                                }
                            }
                        }
                    }
                });
            }
            Op::Softmax(x) => {
                let cols = *node.shape.last().unwrap();
                let yv = &node.data;
                acc(*x, &mut |gx| {
                    for ((gx, grow), yrow) in gx
                        .chunks_exact_mut(cols)
                        .zip(g.chunks_exact(cols))
                        .zip(yv.chunks_exact(cols))
                    {
                        let dot: T = grow.iter().zip(yrow).map(|(&a, &b)| a * b).sum();
                        for ((gx, &gv), &yvv) in gx.iter_mut().zip(grow).zip(yrow) {
                            *gx += yvv * (gv - dot);
                        }
                    }
                });
            }
            Op::SumAll(x) => {
                let gv = g[0];
                acc(*x, &mut |gx| {
                    for v in gx.iter_mut() {
                        *v += gv;
                    }
                });
            }
            Op::MeanAll(x) => {
                let n = self.nodes[x.0].data.len();
                let gv = g[0] / T::from_f64(n as f64);
                acc(*x, &mut |gx| {
                    for v in gx.iter_mut() {
                        *v += gv;
                    }
                });
            }
            Op::MinAll(x) => {
                let idx = argext(val(*x), false);
                acc(*x, &mut |gx| gx[idx] += g[0]);
            }
            Op::MaxAll(x) => {
                let idx = argext(val(*x), true);
                acc(*x, &mut |gx| gx[idx] += g[0]);
            }
            Op::Concat { inputs, axis } => {
                let out_shape = &node.shape;
                let outer: usize = out_shape[..*axis].iter().product();
                let inner: usize = out_shape[*axis + 1..].iter().product();
                let out_block = out_shape[*axis] * inner;
                let mut offset = 0;
                for &inp in inputs {
                    let block = shp(inp)[*axis] * inner;
                    let off = offset;
                    acc(inp, &mut |gi| {
                        for o in 0..outer {
                            let src = &g[o * out_block + off..o * out_block + off + block];
                            add_assign(&mut gi[o * block..(o + 1) * block], src);
                        }
                    });
                    offset += block;
                }
            }
            Op::Reshape(x) => acc(*x, &mut |gx| add_assign(gx, g)),
            Op::NormalizePairs { x, eps } => {
                let xv = val(*x);
                let eps = *eps;
                acc(*x, &mut |gx| {
                    for i in (0..xv.len()).step_by(2) {
                        let (a, b) = (xv[i], xv[i + 1]);
                        let r2 = a * a + b * b + eps;
                        let r = r2.sqrt();
                        let dot = a * g[i] + b * g[i + 1];
                        gx[i] += g[i] / r - a * dot / (r2 * r);
                        gx[i + 1] += g[i + 1] / r - b * dot / (r2 * r);
                    }
                });
            }
            Op::PairAngles(x) => {
                let xv = val(*x);
                acc(*x, &mut |gx| {
                    for (j, &gv) in g.iter().enumerate() {
                        let (a, b) = (xv[2 * j], xv[2 * j + 1]);
                        let q = a * a + b * b;
                        gx[2 * j] += gv * (-b / q);
                        gx[2 * j + 1] += gv * (a / q);
                    }
                });
            }
            Op::CyclicHistogram { x, k } => {
                let sx = shp(*x).to_vec();
                let xv = val(*x);
                let k = *k;
                acc(*x, &mut |gx| {
                    let (rows, cols) = hist_layout(&sx);
                    let delta = T::from_f64(std::f64::consts::TAU / k as f64);
                    let scale = T::ONE / (T::from_f64(rows as f64) * delta);
                    for r in 0..rows {
                        for c in 0..cols {
                            let (r0, r1, _) = hist_bins::<T>(xv[r * cols + c], k);
                            let gbase = c * k;
                            gx[r * cols + c] += (g[gbase + r1] - g[gbase + r0]) * scale;
                        }
                    }
                });
            }
            Op::TopKMean { x, keep } => {
                let sel = top_k_indices(val(*x), *keep);
                let gv = g[0] / T::from_f64(*keep as f64);
                acc(*x, &mut |gx| {
                    for &i in &sel {
                        gx[i] += gv;
                    }
                });
            }
            Op::ReconImageMap { x, y } => {
                let sx = shp(*x).to_vec();
                let (xv, yv) = (val(*x), val(*y));
                acc(*x, &mut |gx| {
                    recon_map_backward(gx, g, xv, yv, &sx, true);
                });
                acc(*y, &mut |gy| {
                    recon_map_backward(gy, g, xv, yv, &sx, false);
                });
            }
            Op::BatchNorm { x, gamma, beta, eps } => {
                let sx = shp(*x).to_vec();
                let xv = val(*x);
                let gammav = val(*gamma);
                let (mean, var) = bn_stats(&sx, xv);
                let (c, m, index) = bn_index(&sx);
                let istd: Vec<T> = var.iter().map(|&v| T::ONE / (v + *eps).sqrt()).collect();
                // per-channel sums of g and g * xhat
                let mut sum_g = vec![T::ZERO; c];
                let mut sum_gx = vec![T::ZERO; c];
                for i in 0..xv.len() {
                    let ch = index(i);
                    let xhat = (xv[i] - mean[ch]) * istd[ch];
                    sum_g[ch] += g[i];
                    sum_gx[ch] += g[i] * xhat;
                }
                acc(*beta, &mut |gb| add_assign(gb, &sum_g));
                acc(*gamma, &mut |gg| add_assign(gg, &sum_gx));
                acc(*x, &mut |gx| {
                    let mf = T::from_f64(m as f64);
                    for i in 0..xv.len() {
                        let ch = index(i);
                        let xhat = (xv[i] - mean[ch]) * istd[ch];
                        gx[i] += gammav[ch] * istd[ch] / mf
                            * (mf * g[i] - sum_g[ch] - xhat * sum_gx[ch]);
                    }
                });
            }
            Op::BatchNormAffine {
                x,
                gamma,
                beta,
                mean,
                var,
                eps,
            } => {
                let sx = shp(*x).to_vec();
                let xv = val(*x);
                let gammav = val(*gamma);
                let (c, _, index) = bn_index(&sx);
                let istd: Vec<T> = var.iter().map(|&v| T::ONE / (v + *eps).sqrt()).collect();
                let mut sum_g = vec![T::ZERO; c];
                let mut sum_gx = vec![T::ZERO; c];
                for i in 0..xv.len() {
                    let ch = index(i);
                    sum_g[ch] += g[i];
                    sum_gx[ch] += g[i] * (xv[i] - mean[ch]) * istd[ch];
                }
                acc(*beta, &mut |gb| add_assign(gb, &sum_g));
                acc(*gamma, &mut |gg| add_assign(gg, &sum_gx));
                acc(*x, &mut |gx| {
                    for i in 0..xv.len() {
                        let ch = index(i);
                        gx[i] += g[i] * gammav[ch] * istd[ch];
                    }
                });
            }
            Op::SelectColumns { x, cols } => {
                let ncols = shp(*x)[1];
                acc(*x, &mut |gx| {
                    for (row, &col) in cols.iter().enumerate() {
                        gx[row * ncols + col] += g[row];
                    }
                });
            }
            Op::BroadcastSpatial { x, h, w } => {
                let plane = h * w;
                acc(*x, &mut |gx| {
                    for (i, gxv) in gx.iter_mut().enumerate() {
                        let s: T = g[i * plane..(i + 1) * plane].iter().copied().sum();
                        *gxv += s;
                    }
                });
            }
        }
    }
}

pub(crate) fn op_name<T>(op: &Op<T>) -> &'static str {
    match op {
        Op::Leaf { .. } => "leaf",
        Op::Add(..) => "add",
        Op::Sub(..) => "sub",
        Op::Mul(..) => "mul",
        Op::Div(..) => "div",
        Op::Scale(..) => "scale",
        Op::AddScalar(..) => "add_scalar",
        Op::PowScalar(..) => "pow_scalar",
        Op::Abs(..) => "abs",
        Op::Exp(..) => "exp",
        Op::Log(..) => "log",
        Op::Sqrt(..) => "sqrt",
        Op::Square(..) => "square",
        Op::Elu(..) => "elu",
        Op::Squash01(..) => "squash01",
        Op::Matmul(..) => "matmul",
        Op::AddRowBias(..) => "add_row_bias",
        Op::AddChannelBias(..) => "add_channel_bias",
        Op::Conv2d { .. } => "conv2d",
        Op::AvgPool { .. } => "avg_pool",
        Op::UpsampleNearest2(..) => "upsample_nearest",
        Op::Softmax(..) => "softmax",
        Op::SumAll(..) => "sum",
        Op::MeanAll(..) => "mean",
        Op::MinAll(..) => "min",
        Op::MaxAll(..) => "max",
        Op::Concat { .. } => "concat",
        Op::Reshape(..) => "reshape",
        Op::StopGradient(..) => "stop_gradient",
        Op::NormalizePairs { .. } => "normalize_pairs",
        Op::PairAngles(..) => "pair_angles",
        Op::CyclicHistogram { .. } => "cyclic_histogram",
        Op::TopKMean { .. } => "top_k_mean",
        Op::ReconImageMap { .. } => "recon_image_map",
        Op::BatchNorm { .. } => "batch_norm",
        Op::BatchNormAffine { .. } => "batch_norm_affine",
        Op::SelectColumns { .. } => "select_columns",
        Op::BroadcastSpatial { .. } => "broadcast_spatial",
    }
}

// ---- forward kernels ----------------------------------------------------

fn eval_op<T: Scalar>(nodes: &[Node<T>], op: &Op<T>, out_shape: &[usize]) -> Vec<T> {
    let val = |id: &ValueId| -> &[T] { &nodes[id.0].data };
    let shp = |id: &ValueId| -> &[usize] { &nodes[id.0].shape };
    match op {
        Op::Leaf { .. } => unreachable!("leaves are not evaluated"),
        Op::Add(a, b) => zip_map(val(a), val(b), |a, b| a + b),
        Op::Sub(a, b) => zip_map(val(a), val(b), |a, b| a - b),
        Op::Mul(a, b) => zip_map(val(a), val(b), |a, b| a * b),
        Op::Div(a, b) => zip_map(val(a), val(b), |a, b| a / b),
        Op::Scale(x, c) => val(x).iter().map(|&v| v * *c).collect(),
        Op::AddScalar(x, c) => val(x).iter().map(|&v| v + *c).collect(),
        Op::PowScalar(x, c) => val(x).iter().map(|&v| v.powf(*c)).collect(),
        Op::Abs(x) => val(x).iter().map(|&v| v.abs()).collect(),
        Op::Exp(x) => val(x).iter().map(|&v| v.exp()).collect(),
        Op::Log(x) => val(x).iter().map(|&v| v.ln()).collect(),
        Op::Sqrt(x) => val(x).iter().map(|&v| v.sqrt()).collect(),
        Op::Square(x) => val(x).iter().map(|&v| v * v).collect(),
        Op::Elu(x) => val(x)
            .iter()
            .map(|&v| if v > T::ZERO { v } else { v.exp() - T::ONE })
            .collect(),
        Op::Squash01(x) => {
            let half = T::from_f64(0.5);
            val(x).iter().map(|&v| half * (v.tanh() + T::ONE)).collect()
        }
        Op::Matmul(a, b) => {
            let (m, k) = (shp(a)[0], shp(a)[1]);
            let n = shp(b)[1];
            let (av, bv) = (val(a), val(b));
            let mut out = vec![T::ZERO; m * n];
            for i in 0..m {
                let orow = &mut out[i * n..(i + 1) * n];
                for l in 0..k {
                    let a_il = av[i * k + l];
                    let brow = &bv[l * n..(l + 1) * n];
                    for (o, &b) in orow.iter_mut().zip(brow) {
                        *o += a_il * b;
                    }
                }
            }
            out
        }
        Op::AddRowBias(x, bias) => {
            let f = shp(bias)[0];
            let bv = val(bias);
            val(x)
                .chunks_exact(f)
                .flat_map(|row| row.iter().zip(bv).map(|(&a, &b)| a + b).collect::<Vec<_>>())
                .collect()
        }
        Op::AddChannelBias(x, bias) => {
            let sx = shp(x);
            let (c, plane) = (sx[1], sx[2] * sx[3]);
            let bv = val(bias);
            let xv = val(x);
            let mut out = xv.to_vec();
            for img in out.chunks_exact_mut(c * plane) {
                for (ch, &b) in bv.iter().enumerate() {
                    for v in img[ch * plane..(ch + 1) * plane].iter_mut() {
                        *v += b;
                    }
                }
            }
            out
        }
        Op::Conv2d { x, w, pad } => conv2d_forward(val(x), val(w), shp(x), shp(w), out_shape, *pad),
        Op::AvgPool { x, kernel, stride } => {
            let (kernel, stride) = (*kernel, *stride);
            let sx = shp(x);
            let xv = val(x);
            let (n, c, ih, iw) = (sx[0], sx[1], sx[2], sx[3]);
            let (oh, ow) = (out_shape[2], out_shape[3]);
            let inv = T::ONE / T::from_f64((kernel * kernel) as f64);
            let mut out = vec![T::ZERO; n * c * oh * ow];
            for ni in 0..n {
                for ci in 0..c {
                    let xbase = (ni * c + ci) * ih * iw;
                    let obase = (ni * c + ci) * oh * ow;
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let mut s = T::ZERO;
                            for ky in 0..kernel {
                                let row = xbase + (oy * stride + ky) * iw + ox * stride;
                                for kx in 0..kernel {
                                    s += xv[row + kx];
                                }
                            }
                            out[obase + oy * ow + ox] = s * inv;
                        }
                    }
                }
            }
            out
        }
        Op::UpsampleNearest2(x) => {
            let sx = shp(x);
            let xv = val(x);
            let (n, c, h, w) = (sx[0], sx[1], sx[2], sx[3]);
            let (oh, ow) = (h * 2, w * 2);
            let mut out = vec![T::ZERO; n * c * oh * ow];
            for ni in 0..n {
                for ci in 0..c {
                    let ibase = (ni * c + ci) * h * w;
                    let obase = (ni * c + ci) * oh * ow;
                    for oy in 0..oh {
                        for ox in 0..ow {
                            out[obase + oy * ow + ox] = xv[ibase + (oy / 2) * w + ox / 2];
                        }
                    }
                }
            }
            out
        }
        Op::Softmax(x) => {
            let cols = *shp(x).last().unwrap();
            let mut out = Vec::with_capacity(val(x).len());
            for row in val(x).chunks_exact(cols) {
                let mx = row.iter().copied().fold(row[0], |a, b| if b > a { b } else { a });
                let exps: Vec<T> = row.iter().map(|&v| (v - mx).exp()).collect();
                let s: T = exps.iter().copied().sum();
                out.extend(exps.iter().map(|&e| e / s));
            }
            out
        }
        Op::SumAll(x) => vec![val(x).iter().copied().sum()],
        Op::MeanAll(x) => {
            let xv = val(x);
            let s: T = xv.iter().copied().sum();
            vec![s / T::from_f64(xv.len() as f64)]
        }
        Op::MinAll(x) => vec![val(x)[argext(val(x), false)]],
        Op::MaxAll(x) => vec![val(x)[argext(val(x), true)]],
        Op::Concat { inputs, axis } => {
            let outer: usize = out_shape[..*axis].iter().product();
            let inner: usize = out_shape[*axis + 1..].iter().product();
            let out_block = out_shape[*axis] * inner;
            let mut out = vec![T::ZERO; numel(out_shape)];
            let mut offset = 0;
            for id in inputs {
                let block = shp(id)[*axis] * inner;
                let src = val(id);
                for o in 0..outer {
                    out[o * out_block + offset..o * out_block + offset + block]
                        .copy_from_slice(&src[o * block..(o + 1) * block]);
                }
                offset += block;
            }
            out
        }
        Op::Reshape(x) | Op::StopGradient(x) => val(x).to_vec(),
        Op::NormalizePairs { x, eps } => {
            let xv = val(x);
            let mut out = vec![T::ZERO; xv.len()];
            for i in (0..xv.len()).step_by(2) {
                let (a, b) = (xv[i], xv[i + 1]);
                let r = (a * a + b * b + *eps).sqrt();
                out[i] = a / r;
                out[i + 1] = b / r;
            }
            out
        }
        Op::PairAngles(x) => {
            let xv = val(x);
            (0..xv.len() / 2)
                .map(|j| xv[2 * j + 1].atan2(xv[2 * j]))
                .collect()
        }
        Op::CyclicHistogram { x, k } => {
            let sx = shp(x);
            let xv = val(x);
            let (rows, cols) = hist_layout(sx);
            let mut out = vec![T::ZERO; cols * k];
            let w = T::ONE / T::from_f64(rows as f64);
            for r in 0..rows {
                for c in 0..cols {
                    let (r0, r1, frac) = hist_bins::<T>(xv[r * cols + c], *k);
                    out[c * k + r0] += (T::ONE - frac) * w;
                    out[c * k + r1] += frac * w;
                }
            }
            out
        }
        Op::TopKMean { x, keep } => {
            let xv = val(x);
            let sel = top_k_indices(xv, *keep);
            let s: T = sel.iter().map(|&i| xv[i]).sum();
            vec![s / T::from_f64(*keep as f64)]
        }
        Op::ReconImageMap { x, y } => recon_map_forward(val(x), val(y), shp(x)),
        Op::BatchNorm { x, gamma, beta, eps } => {
            let sx = shp(x);
            let xv = val(x);
            let (mean, var) = bn_stats(sx, xv);
            bn_apply(sx, xv, val(gamma), val(beta), &mean, &var, *eps)
        }
        Op::BatchNormAffine {
            x,
            gamma,
            beta,
            mean,
            var,
            eps,
        } => bn_apply(shp(x), val(x), val(gamma), val(beta), mean, var, *eps),
        Op::SelectColumns { x, cols } => {
            let ncols = shp(x)[1];
            let xv = val(x);
            cols.iter()
                .enumerate()
                .map(|(row, &col)| xv[row * ncols + col])
                .collect()
        }
        Op::BroadcastSpatial { x, h, w } => {
            let xv = val(x);
            let mut out = Vec::with_capacity(xv.len() * h * w);
            for &v in xv {
                out.extend(std::iter::repeat(v).take(h * w));
            }
            out
        }
    }
}

fn zip_map<T: Scalar>(a: &[T], b: &[T], f: impl Fn(T, T) -> T) -> Vec<T> {
    a.iter().zip(b).map(|(&a, &b)| f(a, b)).collect()
}

fn add_assign<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn sub_assign<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d -= s;
    }
}

fn sign<T: Scalar>(v: T) -> T {
    if v > T::ZERO {
        T::ONE
    } else if v < T::ZERO {
        -T::ONE
    } else {
        T::ZERO
    }
}

/// Index of the first extremal element (max when `largest`, else min).
fn argext<T: Scalar>(v: &[T], largest: bool) -> usize {
    let mut best = 0;
    for i in 1..v.len() {
        let better = if largest { v[i] > v[best] } else { v[i] < v[best] };
        if better {
            best = i;
        }
    }
    best
}

/// Indices of the `keep` largest entries, ties broken by lower index.
fn top_k_indices<T: Scalar>(v: &[T], keep: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_unstable_by(|&a, &b| {
        v[b].partial_cmp(&v[a])
            .expect("non-finite value in top-k selection")
            .then(a.cmp(&b))
    });
    idx.truncate(keep);
    idx
}

/// (rows, cols) layout for the cyclic histogram: rank-1 input is a single
/// column of N angles, rank-2 `[n, d]` is d columns of n angles.
fn hist_layout(shape: &[usize]) -> (usize, usize) {
    match shape.len() {
        1 => (shape[0], 1),
        2 => (shape[0], shape[1]),
        _ => unreachable!(),
    }
}

/// Node pair and interpolation weight for one angle. Nodes sit at
/// `-pi + 2*pi*r/k`; the wrap between node k-1 and node 0 closes the circle.
fn hist_bins<T: Scalar>(angle: T, k: usize) -> (usize, usize, T) {
    let delta = std::f64::consts::TAU / k as f64;
    let p = (angle.to_f64() + std::f64::consts::PI) / delta;
    let base = p.floor();
    let frac = p - base;
    let r0 = (base as isize).rem_euclid(k as isize) as usize;
    let r1 = (r0 + 1) % k;
    (r0, r1, T::from_f64(frac))
}

fn conv2d_forward<T: Scalar>(
    xv: &[T],
    wv: &[T],
    sx: &[usize],
    sw: &[usize],
    so: &[usize],
    pad: usize,
) -> Vec<T> {
    let (n, cin, ih, iw) = (sx[0], sx[1], sx[2], sx[3]);
    let (cout, _, kh, kw) = (sw[0], sw[1], sw[2], sw[3]);
    let (oh, ow) = (so[2], so[3]);
    let mut out = vec![T::ZERO; n * cout * oh * ow];
    for ni in 0..n {
        for co in 0..cout {
            let obase = (ni * cout + co) * oh * ow;
            for ci in 0..cin {
                let xbase = (ni * cin + ci) * ih * iw;
                let wbase = (co * cin + ci) * kh * kw;
                for ky in 0..kh {
                    for kx in 0..kw {
                        let wvv = wv[wbase + ky * kw + kx];
                        for oy in 0..oh {
                            let iy = (oy + ky).wrapping_sub(pad);
                            if iy >= ih {
                                continue;
                            }
                            // valid ox range so that ix = ox + kx - pad is in bounds
                            let ox_lo = pad.saturating_sub(kx);
                            let ox_hi = (iw + pad - kx).min(ow);
                            if ox_lo >= ox_hi {
                                continue;
                            }
                            let orow = obase + oy * ow;
                            let xrow = xbase + iy * iw + ox_lo + kx - pad;
                            let len = ox_hi - ox_lo;
                            let xs = &xv[xrow..xrow + len];
                            let os = &mut out[orow + ox_lo..orow + ox_lo + len];
                            for (o, &x) in os.iter_mut().zip(xs) {
                                *o += wvv * x;
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

fn conv2d_backward_input<T: Scalar>(
    gx: &mut [T],
    g: &[T],
    wv: &[T],
    sx: &[usize],
    sw: &[usize],
    so: &[usize],
    pad: usize,
) {
    let (n, cin, ih, iw) = (sx[0], sx[1], sx[2], sx[3]);
    let (cout, _, kh, kw) = (sw[0], sw[1], sw[2], sw[3]);
    let (oh, ow) = (so[2], so[3]);
    for ni in 0..n {
        for co in 0..cout {
            let gbase = (ni * cout + co) * oh * ow;
            for ci in 0..cin {
                let xbase = (ni * cin + ci) * ih * iw;
                let wbase = (co * cin + ci) * kh * kw;
                for ky in 0..kh {
                    for kx in 0..kw {
                        let wvv = wv[wbase + ky * kw + kx];
                        for oy in 0..oh {
                            let iy = (oy + ky).wrapping_sub(pad);
                            if iy >= ih {
                                continue;
                            }
                            let ox_lo = pad.saturating_sub(kx);
                            let ox_hi = (iw + pad - kx).min(ow);
                            if ox_lo >= ox_hi {
                                continue;
                            }
                            let grow = gbase + oy * ow;
                            let xrow = xbase + iy * iw + ox_lo + kx - pad;
                            let len = ox_hi - ox_lo;
                            let gs = &g[grow + ox_lo..grow + ox_lo + len];
                            let xs = &mut gx[xrow..xrow + len];
                            for (x, &gv) in xs.iter_mut().zip(gs) {
                                *x += wvv * gv;
                            }
                        }
                    }
                }
            }
        }
    }
}

fn conv2d_backward_weight<T: Scalar>(
    gw: &mut [T],
    g: &[T],
    xv: &[T],
    sx: &[usize],
    sw: &[usize],
    so: &[usize],
    pad: usize,
) {
    let (n, cin, ih, iw) = (sx[0], sx[1], sx[2], sx[3]);
    let (cout, _, kh, kw) = (sw[0], sw[1], sw[2], sw[3]);
    let (oh, ow) = (so[2], so[3]);
    for ni in 0..n {
        for co in 0..cout {
            let gbase = (ni * cout + co) * oh * ow;
            for ci in 0..cin {
                let xbase = (ni * cin + ci) * ih * iw;
                let wbase = (co * cin + ci) * kh * kw;
                for ky in 0..kh {
                    for kx in 0..kw {
                        let mut s = T::ZERO;
                        for oy in 0..oh {
                            let iy = (oy + ky).wrapping_sub(pad);
                            if iy >= ih {
                                continue;
                            }
                            let ox_lo = pad.saturating_sub(kx);
                            let ox_hi = (iw + pad - kx).min(ow);
                            if ox_lo >= ox_hi {
                                continue;
                            }
                            let grow = gbase + oy * ow;
                            let xrow = xbase + iy * iw + ox_lo + kx - pad;
                            let len = ox_hi - ox_lo;
                            let gs = &g[grow + ox_lo..grow + ox_lo + len];
                            let xs = &xv[xrow..xrow + len];
                            for (&gv, &x) in gs.iter().zip(xs) {
                                s += gv * x;
                            }
                        }
                        gw[wbase + ky * kw + kx] += s;
                    }
                }
            }
        }
    }
}

// ---- reconstruction-map kernels -----------------------------------------

const LUMA_R: f64 = 0.299;
const LUMA_G: f64 = 0.587;
const LUMA_B: f64 = 0.114;

fn luma<T: Scalar>(img: &[T], plane: usize) -> Vec<T> {
    let (wr, wg, wb) = (
        T::from_f64(LUMA_R),
        T::from_f64(LUMA_G),
        T::from_f64(LUMA_B),
    );
    (0..plane)
        .map(|i| wr * img[i] + wg * img[plane + i] + wb * img[2 * plane + i])
        .collect()
}

/// Central differences with replicated border; returns (d/du, d/dv) where u
/// indexes rows and v columns.
fn central_diff<T: Scalar>(yc: &[T], h: usize, w: usize) -> (Vec<T>, Vec<T>) {
    let half = T::from_f64(0.5);
    let mut du = vec![T::ZERO; h * w];
    let mut dv = vec![T::ZERO; h * w];
    for i in 0..h {
        let up = if i == 0 { 0 } else { i - 1 };
        let dn = if i + 1 == h { h - 1 } else { i + 1 };
        for j in 0..w {
            let lf = if j == 0 { 0 } else { j - 1 };
            let rt = if j + 1 == w { w - 1 } else { j + 1 };
            du[i * w + j] = (yc[dn * w + j] - yc[up * w + j]) * half;
            dv[i * w + j] = (yc[i * w + rt] - yc[i * w + lf]) * half;
        }
    }
    (du, dv)
}

fn grad_mag<T: Scalar>(img: &[T], h: usize, w: usize) -> Vec<T> {
    let yc = luma(img, h * w);
    let (du, dv) = central_diff(&yc, h, w);
    du.iter().zip(&dv).map(|(&a, &b)| a.abs() + b.abs()).collect()
}

fn recon_map_forward<T: Scalar>(xv: &[T], yv: &[T], sx: &[usize]) -> Vec<T> {
    let (n, h, w) = (sx[0], sx[2], sx[3]);
    let plane = h * w;
    let two = T::from_f64(2.0);
    let mut out = vec![T::ZERO; n * plane];
    for ni in 0..n {
        let ximg = &xv[ni * 3 * plane..(ni + 1) * 3 * plane];
        let yimg = &yv[ni * 3 * plane..(ni + 1) * 3 * plane];
        let mx = grad_mag(ximg, h, w);
        let my = grad_mag(yimg, h, w);
        let o = &mut out[ni * plane..(ni + 1) * plane];
        for c in 0..3 {
            for i in 0..plane {
                o[i] += two * (ximg[c * plane + i] - yimg[c * plane + i]).abs();
            }
        }
        for i in 0..plane {
            o[i] += (mx[i] - my[i]).abs();
        }
    }
    out
}

/// Gradient of the per-pixel map with respect to image `x` (when `wrt_x`) or
/// image `y`. Recomputes the luma stencils rather than saving them.
fn recon_map_backward<T: Scalar>(
    gimg: &mut [T],
    g: &[T],
    xv: &[T],
    yv: &[T],
    sx: &[usize],
    wrt_x: bool,
) {
    let (n, h, w) = (sx[0], sx[2], sx[3]);
    let plane = h * w;
    let two = T::from_f64(2.0);
    let half = T::from_f64(0.5);
    let weights = [
        T::from_f64(LUMA_R),
        T::from_f64(LUMA_G),
        T::from_f64(LUMA_B),
    ];
    for ni in 0..n {
        let ximg = &xv[ni * 3 * plane..(ni + 1) * 3 * plane];
        let yimg = &yv[ni * 3 * plane..(ni + 1) * 3 * plane];
        let gmap = &g[ni * plane..(ni + 1) * plane];
        let gout = &mut gimg[ni * 3 * plane..(ni + 1) * 3 * plane];

        // color term: d/dx 2|x - y| = 2 sign(x - y); for y the sign flips
        for c in 0..3 {
            for i in 0..plane {
                let d = ximg[c * plane + i] - yimg[c * plane + i];
                let s = two * sign(d);
                gout[c * plane + i] += if wrt_x { gmap[i] * s } else { -(gmap[i] * s) };
            }
        }

        // gradient-magnitude term through the luma of the target image
        let img = if wrt_x { ximg } else { yimg };
        let yc = luma(img, plane);
        let (du, dv) = central_diff(&yc, h, w);
        let mx = grad_mag(ximg, h, w);
        let my = grad_mag(yimg, h, w);
        let mut dy_luma = vec![T::ZERO; plane];
        for i in 0..h {
            let up = if i == 0 { 0 } else { i - 1 };
            let dn = if i + 1 == h { h - 1 } else { i + 1 };
            for j in 0..w {
                let lf = if j == 0 { 0 } else { j - 1 };
                let rt = if j + 1 == w { w - 1 } else { j + 1 };
                let p = i * w + j;
                let outer = gmap[p] * sign(mx[p] - my[p]);
                let t = if wrt_x { outer } else { -outer };
                let cu = t * sign(du[p]) * half;
                dy_luma[dn * w + j] += cu;
                dy_luma[up * w + j] -= cu;
                let cv = t * sign(dv[p]) * half;
                dy_luma[i * w + rt] += cv;
                dy_luma[i * w + lf] -= cv;
            }
        }
        for (c, &wc) in weights.iter().enumerate() {
            for i in 0..plane {
                gout[c * plane + i] += wc * dy_luma[i];
            }
        }
    }
}

// ---- batch-norm helpers --------------------------------------------------

fn bn_channels(shape: &[usize]) -> usize {
    match shape.len() {
        2 => shape[1],
        4 => shape[1],
        r => panic!("batch_norm supports rank 2 or 4 inputs, got rank {r}"),
    }
}

/// (channel count, elements per channel, flat-index -> channel map).
fn bn_index(shape: &[usize]) -> (usize, usize, impl Fn(usize) -> usize) {
    let rank = shape.len();
    let c = bn_channels(shape);
    let plane = if rank == 4 { shape[2] * shape[3] } else { 1 };
    let m = shape[0] * plane;
    let index = move |i: usize| -> usize { (i / plane) % c };
    (c, m, index)
}

fn bn_stats<T: Scalar>(shape: &[usize], xv: &[T]) -> (Vec<T>, Vec<T>) {
    let (c, m, index) = bn_index(shape);
    let mf = T::from_f64(m as f64);
    let mut mean = vec![T::ZERO; c];
    for (i, &v) in xv.iter().enumerate() {
        mean[index(i)] += v;
    }
    for v in mean.iter_mut() {
        *v = *v / mf;
    }
    let mut var = vec![T::ZERO; c];
    for (i, &v) in xv.iter().enumerate() {
        let d = v - mean[index(i)];
        var[index(i)] += d * d;
    }
    for v in var.iter_mut() {
        *v = *v / mf;
    }
    (mean, var)
}

fn bn_apply<T: Scalar>(
    shape: &[usize],
    xv: &[T],
    gamma: &[T],
    beta: &[T],
    mean: &[T],
    var: &[T],
    eps: T,
) -> Vec<T> {
    let (_, _, index) = bn_index(shape);
    let istd: Vec<T> = var.iter().map(|&v| T::ONE / (v + eps).sqrt()).collect();
    xv.iter()
        .enumerate()
        .map(|(i, &v)| {
            let ch = index(i);
            gamma[ch] * (v - mean[ch]) * istd[ch] + beta[ch]
        })
        .collect()
}
